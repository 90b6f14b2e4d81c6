use proptest::prelude::*;
use sgs_core::conv::{conv_backward_input, conv_backward_weights, conv_forward, ConvSpec};
use sgs_core::reparam::BranchMask;
use sgs_core::rng::SeededRng;
use sgs_core::Tensor4;

fn random(shape: [usize; 4], rng: &mut SeededRng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.normal())
}

fn dot(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// L = <conv(X, W), R>, so dL/dW = backward_weights(R, X), dL/dX = backward_input(R, W).
fn check_fd(spec: ConvSpec, hw: (usize, usize), seed: u64) {
    let mut rng = SeededRng::new(seed);
    let x = random([2, spec.in_channels, hw.0, hw.1], &mut rng);
    let w = random(spec.weight_shape(), &mut rng);
    let (oh, ow) = spec.output_size(hw.0, hw.1).unwrap();
    let r = random([2, spec.out_channels, oh, ow], &mut rng);
    let loss = |x: &Tensor4<f64>, w: &Tensor4<f64>| dot(&conv_forward(x, w, &spec).unwrap(), &r);
    let h = 1e-5;

    let dw = conv_backward_weights(&r, &x, &spec).unwrap();
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp.data_mut()[i] += h;
        wm.data_mut()[i] -= h;
        let fd = (loss(&x, &wp) - loss(&x, &wm)) / (2.0 * h);
        let an = dw.data()[i];
        let rel = (fd - an).abs() / an.abs().max(1.0);
        assert!(rel <= 1e-5, "dW[{i}] {spec:?}: fd {fd} vs {an}");
    }

    let dx = conv_backward_input(&r, &w, &spec, hw).unwrap();
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.data_mut()[i] += h;
        xm.data_mut()[i] -= h;
        let fd = (loss(&xp, &w) - loss(&xm, &w)) / (2.0 * h);
        let an = dx.data()[i];
        let rel = (fd - an).abs() / an.abs().max(1.0);
        assert!(rel <= 1e-5, "dX[{i}] {spec:?}: fd {fd} vs {an}");
    }
}

#[test]
fn finite_differences_same_padding() {
    check_fd(ConvSpec::same(2, 3, (3, 3)), (6, 6), 1);
}

#[test]
fn finite_differences_stride_and_valid() {
    check_fd(ConvSpec::new(2, 2, (3, 3)).with_stride(2), (7, 7), 2);
    check_fd(ConvSpec::new(1, 2, (3, 3)).with_stride(2).with_padding(1), (6, 5), 3);
}

#[test]
fn finite_differences_rectangular_kernels() {
    check_fd(ConvSpec::same(2, 2, (1, 3)), (5, 5), 4);
    check_fd(ConvSpec::new(1, 3, (2, 3)).with_padding(1), (5, 6), 5);
    check_fd(ConvSpec::same(1, 1, (5, 5)), (4, 4), 6);
}

#[test]
fn hand_computed_forward() {
    // 1 channel, 3x3 input 1..9, 2x2 kernel of ones, valid: window sums
    let x = Tensor4::from_vec([1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let w = Tensor4::ones([1, 1, 2, 2]);
    let y = conv_forward(&x, &w, &ConvSpec::new(1, 1, (2, 2))).unwrap();
    assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    // same padding with a center-only 3x3 kernel is the identity
    let mut center = Tensor4::zeros([1, 1, 3, 3]);
    center.set([0, 0, 1, 1], 1.0);
    let y = conv_forward(&x, &center, &ConvSpec::same(1, 1, (3, 3))).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn shape_mismatches_are_errors() {
    let spec = ConvSpec::same(2, 3, (3, 3));
    let x = Tensor4::<f64>::zeros([1, 1, 5, 5]);
    assert!(conv_forward(&x, &Tensor4::zeros(spec.weight_shape()), &spec).is_err());
    let x = Tensor4::<f64>::zeros([1, 2, 5, 5]);
    assert!(conv_forward(&x, &Tensor4::zeros([3, 2, 5, 5]), &spec).is_err());
    let valid = ConvSpec::new(1, 1, (5, 5));
    assert!(conv_forward(&Tensor4::<f64>::zeros([1, 1, 3, 3]), &Tensor4::zeros([1, 1, 5, 5]), &valid).is_err());
}

fn arb_mask(rows: usize, cols: usize) -> impl Strategy<Value = BranchMask> {
    proptest::collection::vec(any::<bool>(), rows * cols)
        .prop_filter("non-empty", |v| v.iter().any(|&b| b))
        .prop_map(move |v| BranchMask::new(rows, cols, v).unwrap())
}

fn max_abs_diff(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_is_linear_in_weights(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let spec = ConvSpec::same(2, 2, (3, 3));
        let mut rng = SeededRng::new(seed);
        let x = random([2, 2, 5, 5], &mut rng);
        let w1 = random(spec.weight_shape(), &mut rng);
        let w2 = random(spec.weight_shape(), &mut rng);
        let combined = w1.scale(a).add(&w2.scale(b)).unwrap();
        let lhs = conv_forward(&x, &combined, &spec).unwrap();
        let rhs = conv_forward(&x, &w1, &spec).unwrap().scale(a)
            .add(&conv_forward(&x, &w2, &spec).unwrap().scale(b)).unwrap();
        prop_assert!(max_abs_diff(&lhs, &rhs) <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn masked_branches_distribute(seed in any::<u64>(), m1 in arb_mask(3, 3), m2 in arb_mask(3, 3)) {
        let spec = ConvSpec::same(2, 3, (3, 3));
        let mut rng = SeededRng::new(seed);
        let x = random([2, 2, 6, 6], &mut rng);
        let w1 = random(spec.weight_shape(), &mut rng);
        let w2 = random(spec.weight_shape(), &mut rng);
        let a = m1.apply(&w1).unwrap();
        let b = m2.apply(&w2).unwrap();
        let merged = conv_forward(&x, &a.add(&b).unwrap(), &spec).unwrap();
        let split = conv_forward(&x, &a, &spec).unwrap().add(&conv_forward(&x, &b, &spec).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&merged, &split) <= 1e-12 * (1.0 + split.max_abs()));
    }

    #[test]
    fn weight_gradient_does_not_depend_on_weights(seed in any::<u64>()) {
        let spec = ConvSpec::new(2, 3, (3, 3)).with_stride(2).with_padding(1);
        let mut rng = SeededRng::new(seed);
        let x = random([2, 2, 7, 7], &mut rng);
        let (oh, ow) = spec.output_size(7, 7).unwrap();
        let dy = random([2, 3, oh, ow], &mut rng);
        let dw = conv_backward_weights(&dy, &x, &spec).unwrap();
        // the signature has no weight argument; check against the explicit sum instead
        let mut oracle = Tensor4::<f64>::zeros(spec.weight_shape());
        for n in 0..2 { for co in 0..3 { for ci in 0..2 { for kh in 0..3 { for kw in 0..3 {
            let mut acc = 0.0;
            for i in 0..oh { for j in 0..ow {
                let r = (i * 2 + kh) as isize - 1;
                let c = (j * 2 + kw) as isize - 1;
                if r >= 0 && c >= 0 && (r as usize) < 7 && (c as usize) < 7 {
                    acc += dy.get([n, co, i, j]) * x.get([n, ci, r as usize, c as usize]);
                }
            }}
            let idx = [co, ci, kh, kw];
            oracle.set(idx, oracle.get(idx) + acc);
        }}}}}
        prop_assert!(max_abs_diff(&dw, &oracle) <= 1e-10);
    }

    #[test]
    fn adjoint_identity(seed in any::<u64>()) {
        // <conv(X, W), R> == <X, conv_backward_input(R, W)> == <W, conv_backward_weights(R, X)>
        let spec = ConvSpec::new(2, 2, (3, 2)).with_padding(1);
        let mut rng = SeededRng::new(seed);
        let x = random([1, 2, 5, 6], &mut rng);
        let w = random(spec.weight_shape(), &mut rng);
        let (oh, ow) = spec.output_size(5, 6).unwrap();
        let r = random([1, 2, oh, ow], &mut rng);
        let y = dot(&conv_forward(&x, &w, &spec).unwrap(), &r);
        let via_x = dot(&x, &conv_backward_input(&r, &w, &spec, (5, 6)).unwrap());
        let via_w = dot(&w, &conv_backward_weights(&r, &x, &spec).unwrap());
        prop_assert!((y - via_x).abs() <= 1e-10 * (1.0 + y.abs()));
        prop_assert!((y - via_w).abs() <= 1e-10 * (1.0 + y.abs()));
    }
}
