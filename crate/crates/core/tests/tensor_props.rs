use proptest::prelude::*;
use stegnet::tensor::{adam_step, AdamConfig, AdamState, BatchNormState, Tape, Tensor};

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

/// Direct sum over a full `[o, c, 3, 3]` kernel with zero padding.
fn conv3_same(x: &[f64], c: usize, h: usize, w: usize, k: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for ic in 0..c {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            s += x[(ic * h + sy as usize) * w + sx as usize] * k[((oc * c + ic) * 3 + dy) * 3 + dx];
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = s;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn separable_equals_composed_full_kernel(x in values(3 * 5 * 6), dw in values(3 * 9), pw in values(4 * 3)) {
        let mut t = Tape::<f64>::new();
        let xv = t.constant(tensor(&[1, 3, 5, 6], x.clone()));
        let d = t.constant(tensor(&[3, 1, 3, 3], dw.clone()));
        let p = t.constant(tensor(&[4, 3, 1, 1], pw.clone()));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.separable_conv2d(xv, d, p, b).unwrap();
        let mut full = vec![0.0; 4 * 3 * 9];
        for o in 0..4 {
            for c in 0..3 {
                for i in 0..9 {
                    full[(o * 3 + c) * 9 + i] = pw[o * 3 + c] * dw[c * 9 + i];
                }
            }
        }
        let want = conv3_same(&x, 3, 5, 6, &full, 4);
        for (a, e) in t.value(y).data().iter().zip(&want) {
            prop_assert!((a - e).abs() < 1e-9, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(a in values(2 * 6 * 6), b in values(2 * 6 * 6), k in values(3 * 2 * 9), s in -3.0f64..3.0) {
        let run = |x: Vec<f64>| {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(tensor(&[1, 2, 6, 6], x));
            let kv = t.constant(tensor(&[3, 2, 3, 3], k.clone()));
            let bv = t.constant(Tensor::zeros(&[3]));
            let y = t.conv2d(xv, kv, bv, 1, 1).unwrap();
            t.value(y).data().to_vec()
        };
        let mixed: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * y).collect();
        let (ya, yb, ym) = (run(a), run(b), run(mixed));
        for i in 0..ym.len() {
            prop_assert!((ym[i] - (ya[i] + s * yb[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn variance_ignores_shifts(x in values(40), shift in -50.0f64..50.0) {
        let v = |d: Vec<f64>| {
            let mut t = Tape::<f64>::new();
            let xv = t.constant(tensor(&[40], d));
            let y = t.variance(xv).unwrap();
            t.value(y).item()
        };
        let base = v(x.clone());
        let shifted = v(x.iter().map(|a| a + shift).collect());
        prop_assert!((base - shifted).abs() < 1e-9 * (1.0 + shift.abs()));
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let want = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        prop_assert!((base - want).abs() < 1e-12);
    }

    #[test]
    fn training_batch_norm_standardizes_each_channel(x in values(3 * 2 * 4 * 4), gamma in values(2), beta in values(2)) {
        let mut state = BatchNormState::<f64>::new(2);
        let mut t = Tape::<f64>::new();
        let xv = t.constant(tensor(&[3, 2, 4, 4], x.clone()));
        let g = t.constant(tensor(&[2], gamma.clone()));
        let b = t.constant(tensor(&[2], beta.clone()));
        let y = t.batch_norm(xv, g, b, &mut state).unwrap();
        let y = t.value(y).data().to_vec();
        for c in 0..2 {
            let pick = |d: &[f64]| -> Vec<f64> {
                (0..3).flat_map(|n| d[(n * 2 + c) * 16..(n * 2 + c + 1) * 16].to_vec()).collect()
            };
            let (xs, ys) = (pick(&x), pick(&y));
            let m = xs.iter().sum::<f64>() / 48.0;
            let var = xs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 48.0;
            for (a, o) in xs.iter().zip(&ys) {
                let want = gamma[c] * (a - m) / (var + 1e-5).sqrt() + beta[c];
                prop_assert!((o - want).abs() < 1e-9);
            }
            let rm = state.running_mean.data()[c];
            let rv = state.running_var.data()[c];
            prop_assert!((rm - 0.1 * m).abs() < 1e-12);
            prop_assert!((rv - (0.9 + 0.1 * var * 48.0 / 47.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate(p0 in -5.0f64..5.0, g in prop::num::f64::NORMAL.prop_filter("not tiny", |g| g.abs() > 1e-3 && g.abs() < 1e6), lr in 1e-6f64..1e-1) {
        let mut p = Tensor::scalar(p0);
        let mut state = AdamState::new(AdamConfig::with_learning_rate(lr), [p.shape()]);
        adam_step(&mut p, &Tensor::scalar(g), &mut state).unwrap();
        let want = p0 - lr * g / (g.abs() + 1e-8);
        prop_assert!((p.item() - want).abs() < 1e-12 * (1.0 + p0.abs()));
    }
}

#[test]
fn adam_matches_hand_rolled_moments() {
    let grads = [0.5, -1.5, 2.0, 0.25, -0.75];
    let cfg = AdamConfig::with_learning_rate(0.01);
    let mut p = Tensor::scalar(1.0f64);
    let mut state = AdamState::new(cfg, [p.shape()]);
    let (mut m, mut v, mut want) = (0.0f64, 0.0f64, 1.0f64);
    for (i, &g) in grads.iter().enumerate() {
        adam_step(&mut p, &Tensor::scalar(g), &mut state).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let t = i as i32 + 1;
        let (mh, vh) = (m / (1.0 - 0.9f64.powi(t)), v / (1.0 - 0.999f64.powi(t)));
        want -= 0.01 * mh / (vh.sqrt() + 1e-8);
        assert!((p.item() - want).abs() < 1e-14, "step {t}: {} vs {want}", p.item());
    }
}

#[test]
fn adam_refuses_non_finite_gradients() {
    let mut p = Tensor::scalar(1.0f64);
    let mut state = AdamState::new(AdamConfig::default(), [p.shape()]);
    assert!(adam_step(&mut p, &Tensor::scalar(f64::NAN), &mut state).is_err());
    assert_eq!(p.item(), 1.0);
    assert_eq!(state.step_count, 0);
}

#[test]
fn eval_batch_norm_uses_running_statistics() {
    let mut state = BatchNormState::<f64>::new(1);
    state.training = false;
    state.running_mean = Tensor::scalar(0.5).reshape(&[1]).unwrap();
    state.running_var = Tensor::scalar(4.0).reshape(&[1]).unwrap();
    let mut t = Tape::<f64>::new();
    let x = t.constant(tensor(&[1, 1, 1, 2], vec![2.5, -1.5]));
    let g = t.constant(tensor(&[1], vec![3.0]));
    let b = t.constant(tensor(&[1], vec![1.0]));
    let y = t.batch_norm(x, g, b, &mut state).unwrap();
    let s = (4.0f64 + 1e-5).sqrt();
    let want = [3.0 * 2.0 / s + 1.0, 3.0 * -2.0 / s + 1.0];
    for (a, e) in t.value(y).data().iter().zip(want) {
        assert!((a - e).abs() < 1e-12);
    }
    assert_eq!(state.running_mean.data(), &[0.5]);
}

#[test]
fn identity_kernel_is_exact() {
    let x: Vec<f64> = (0..2 * 5 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut k = vec![0.0; 2 * 2 * 9];
    k[4] = 1.0;
    k[(3) * 9 + 4] = 1.0;
    let mut t = Tape::<f64>::new();
    let xv = t.constant(tensor(&[1, 2, 5, 5], x.clone()));
    let kv = t.constant(tensor(&[2, 2, 3, 3], k));
    let b = t.constant(Tensor::zeros(&[2]));
    let y = t.conv2d(xv, kv, b, 1, 1).unwrap();
    assert_eq!(t.value(y).data(), &x[..]);
}

#[test]
fn unit_batch_norm_output_is_standard() {
    let x: Vec<f64> = (0..2 * 3 * 8 * 8).map(|i| (i as f64 * 1.7).cos() * 3.0 + 2.0).collect();
    let mut state = BatchNormState::<f64>::new(3);
    let mut t = Tape::<f64>::new();
    let xv = t.constant(tensor(&[2, 3, 8, 8], x));
    let g = t.constant(Tensor::full(&[3], 1.0));
    let b = t.constant(Tensor::zeros(&[3]));
    let y = t.batch_norm(xv, g, b, &mut state).unwrap();
    let y = t.value(y).data().to_vec();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|n| y[(n * 3 + c) * 64..(n * 3 + c + 1) * 64].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / 128.0;
        let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 128.0;
        assert!(m.abs() < 1e-6);
        assert!((v - 1.0).abs() < 1e-4);
    }
}

#[test]
fn small_reductions() {
    let mut t = Tape::<f64>::new();
    let x = t.leaf(tensor(&[2], vec![0.0, 1.0]), true);
    let v = t.variance(x).unwrap();
    assert_eq!(t.value(v).item(), 0.25);
    let same = t.mean_abs_diff(x, x).unwrap();
    assert_eq!(t.value(same).item(), 0.0);
    let c = t.constant(Tensor::full(&[4], 7.5));
    let vc = t.variance(c).unwrap();
    assert_eq!(t.value(vc).item(), 0.0);

    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::scalar(0.8), true);
    let y = t.scale(x, 3.0);
    t.backward(y).unwrap();
    assert!((t.grad(x).unwrap().item() - 3.0).abs() < 1e-9);
}

#[test]
fn adam_zero_gradient_and_quadratic_descent() {
    let mut p = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
    let mut state = AdamState::new(AdamConfig::with_learning_rate(0.1), [p.shape()]);
    adam_step(&mut p, &Tensor::zeros(&[3]), &mut state).unwrap();
    assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    assert_eq!(state.step_count, 1);

    let mut x = Tensor::scalar(2.0f64);
    let mut state = AdamState::new(AdamConfig::with_learning_rate(0.1), [x.shape()]);
    let mut last = 0.5 * x.item() * x.item();
    for _ in 0..2 {
        let g = Tensor::scalar(x.item());
        adam_step(&mut x, &g, &mut state).unwrap();
        let now = 0.5 * x.item() * x.item();
        assert!(now < last);
        last = now;
    }
}
