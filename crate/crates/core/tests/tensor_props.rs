use proptest::prelude::*;

use robustkit::gradcheck::{analytic_gradients, numeric_gradients, random_case, GRADCHECK_STEP};
use robustkit::models::softmax;
use robustkit::tensor::{one_hot, Reduction, Tape, Tensor};

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    out
}

/// Direct convolution written from the definition: zero padding, terms
/// summed over (channel, row, col) from zero, bias added last.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for s in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let r = (i * stride + ki) as isize - pad as isize;
                                let q = (j * stride + kj) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((s * c + ch) * h + r as usize) * wd + q as usize];
                                acc += xv * w.data()[((o * c + ch) * k + ki) * k + kj];
                            }
                        }
                    }
                    out.push(acc + b[o]);
                }
            }
        }
    }
    out
}

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_definition((m, k, n, a, b) in (1usize..6, 1usize..6, 1usize..6)
        .prop_flat_map(|(m, k, n)| (Just(m), Just(k), Just(n), values(m * k), values(k * n))))
    {
        let mut tape = Tape::<f64>::no_grad();
        let av = tape.leaf(Tensor::new([m, k], a.clone()).unwrap(), false);
        let bv = tape.leaf(Tensor::new([k, n], b.clone()).unwrap(), false);
        let c = tape.matmul(av, bv).unwrap();
        let want = naive_matmul(&a, &b, m, k, n);
        for (got, want) in tape.value(c).data().iter().zip(&want) {
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    /// Gradients are linear in the loss: grad(a f + b g) = a grad f + b grad g.
    #[test]
    fn backward_is_linear(x in values(12), w in values(12), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |ca: f64, cb: f64| {
            let mut tape = Tape::<f64>::new();
            let xv = tape.leaf(Tensor::new([3, 4], x.clone()).unwrap(), true);
            let wv = tape.leaf(Tensor::new([4, 3], w.clone()).unwrap(), false);
            let f = tape.matmul(xv, wv).unwrap();
            let f = tape.relu(f).unwrap();
            let f = tape.sum(f).unwrap();
            let g = tape.mul(xv, xv).unwrap();
            let g = tape.sum(g).unwrap();
            let fa = tape.scale(f, ca).unwrap();
            let gb = tape.scale(g, cb).unwrap();
            let loss = tape.add(fa, gb).unwrap();
            tape.backward(loss).unwrap().take(xv).unwrap()
        };
        let (gf, gg, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for ((f, g), t) in gf.data().iter().zip(gg.data()).zip(both.data()) {
            prop_assert!((a * f + b * g - t).abs() <= 1e-12 * (1.0 + t.abs()));
        }
    }

    /// f64 convolutions take the direct path and agree bit for bit with the
    /// definition.
    #[test]
    fn conv_f64_is_bit_exact((c, co, h, k, stride, pad, seed) in (1usize..4, 1usize..4, 3usize..8, 1usize..4, 1usize..3, 0usize..2, any::<u64>())
        .prop_filter("kernel fits", |t| t.3 <= t.2 + 2 * t.5))
    {
        let mut g = robustkit::rng::Gaussian::new(seed);
        let x = Tensor::from_fn([2, c, h, h], |_| g.next());
        let w = Tensor::from_fn([co, c, k, k], |_| g.next());
        let b: Vec<f64> = (0..co).map(|_| g.next()).collect();
        let mut tape = Tape::<f64>::no_grad();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), false);
        let bv = tape.leaf(Tensor::new([co], b.clone()).unwrap(), false);
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        prop_assert_eq!(tape.value(y).data(), want.as_slice());
    }

    /// The f32 GEMM path stays within rounding of the f64 definition.
    #[test]
    fn conv_f32_matches_definition((c, co, h, k, stride, pad, seed) in (1usize..4, 1usize..5, 3usize..9, 1usize..4, 1usize..3, 0usize..2, any::<u64>())
        .prop_filter("kernel fits", |t| t.3 <= t.2 + 2 * t.5))
    {
        let mut g = robustkit::rng::Gaussian::new(seed);
        let x = Tensor::from_fn([2, c, h, h], |_| g.next() as f32 as f64);
        let w = Tensor::from_fn([co, c, k, k], |_| g.next() as f32 as f64);
        let b: Vec<f64> = (0..co).map(|_| g.next() as f32 as f64).collect();
        let mut tape = Tape::<f32>::no_grad();
        let xv = tape.leaf(x.cast(), false);
        let wv = tape.leaf(w.cast(), false);
        let bv = tape.leaf(Tensor::new([co], b.iter().map(|&v| v as f32).collect()).unwrap(), false);
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let want = naive_conv(&x, &w, &b, stride, pad);
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            prop_assert!((*got as f64 - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(z in prop::collection::vec(-50.0f64..50.0, 30)) {
        let p = softmax(&Tensor::new([3, 10], z).unwrap());
        for row in p.data().chunks(10) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    /// Gradient check with the central-difference roundoff made explicit:
    /// a coordinate passes when |a - n| <= 1e-4 max(|a|, |n|) + 1e-9. The
    /// absolute term covers cancellation in (f(x+h) - f(x-h)) / 2h, about
    /// ulp(f) / 2h ~ 1e-10 at h = 1e-6.
    #[test]
    fn gradients_match_differences_up_to_roundoff(seed in any::<u64>(), variant in 0usize..5, pnil in any::<bool>()) {
        let case = random_case(seed, variant, pnil);
        let analytic = analytic_gradients(&case).unwrap();
        let numeric = numeric_gradients(&case, GRADCHECK_STEP).unwrap();
        for (a, n) in analytic.iter().zip(&numeric) {
            for (i, (&a, &n)) in a.data().iter().zip(n.data()).enumerate() {
                prop_assert!(
                    (a - n).abs() <= 1e-4 * a.abs().max(n.abs()) + 1e-9,
                    "{} coordinate {}: analytic {:e}, numeric {:e}", case.name, i, a, n
                );
            }
        }
    }
}

#[test]
fn uniform_logits_give_log_k() {
    for k in [2usize, 10, 37] {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(Tensor::full([4, k], 0.7), true);
        let labels = [0, 1, k - 1, 1];
        let l = tape.softmax_cross_entropy(z, &one_hot(&labels, k), Reduction::Mean).unwrap();
        assert!((tape.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_rejects_soft_targets() {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(Tensor::zeros([1, 2]), true);
    let y = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
    assert!(tape.softmax_cross_entropy(z, &y, Reduction::Sum).is_err());
}
