use fetalseg::nnet::gradcheck::{self, CheckReport};
use fetalseg::nnet::layers::{self, ConvShape};
use fetalseg::nnet::loss::soft_dice;
use fetalseg::nnet::{LossKind, Mode, Tensor4, UNet, UNetConfig};
use proptest::prelude::*;

fn assert_all(reports: &[CheckReport], tol: f64) {
    for r in reports {
        println!(
            "{}: {} values, max rel error {:.3e}",
            r.name, r.checked, r.max_rel_error
        );
        assert!(r.passes(tol), "{} exceeds {tol}: {:.3e}", r.name, r.max_rel_error);
    }
}

#[test]
fn conv3x3_gradients_match_finite_differences() {
    assert_all(&gradcheck::check_conv(1).unwrap(), 1e-6);
}

#[test]
fn layer_gradients_match_finite_differences() {
    assert_all(&gradcheck::check_layers(2).unwrap(), 1e-6);
}

#[test]
fn loss_gradients_match_finite_differences() {
    assert_all(&gradcheck::check_losses(3).unwrap(), 1e-6);
}

#[test]
fn network_gradient_depth_two() {
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 4,
        in_channels: 1,
        out_classes: 3,
    };
    let reports = gradcheck::check_network(cfg, 16, 2, &[LossKind::CrossEntropy, LossKind::SoftDice], 4).unwrap();
    assert_all(&reports, 1e-4);
}

#[test]
fn conv_backward_is_adjoint_of_forward() {
    // <conv(x), r> = <x, conv_backward(r)> for a bias-free conv
    let shape = ConvShape::same(3, 2, 3);
    let x = Tensor4::from_vec(1, 3, 5, 6, (0..90).map(|i| ((i * 37 % 17) as f64) - 8.0).collect()).unwrap();
    let r = Tensor4::from_vec(1, 2, 5, 6, (0..60).map(|i| ((i * 11 % 7) as f64) - 3.0).collect()).unwrap();
    let w: Vec<f64> = (0..shape.weight_len()).map(|i| ((i * 5 % 9) as f64) - 4.0).collect();
    let y = layers::conv_forward(&x, &shape, &w, None).unwrap();
    let mut dw = vec![0.0; w.len()];
    let dx = layers::conv_backward(&x, &r, &shape, &w, &mut dw, None);
    let lhs: f64 = y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
    assert_eq!(lhs, rhs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_is_a_distribution(logits in proptest::collection::vec(-30.0f32..30.0, 5 * 4)) {
        let x = Tensor4::from_vec(1, 5, 2, 2, logits).unwrap();
        let p = layers::softmax_forward(&x);
        for px in 0..4 {
            let s: f32 = (0..5).map(|c| p.data[c * 4 + px]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
            prop_assert!((0..5).all(|c| p.data[c * 4 + px] >= 0.0));
        }
    }

    #[test]
    fn soft_dice_equivariant_under_foreground_relabeling(
        logits in proptest::collection::vec(-3.0f64..3.0, 4 * 9),
        target in proptest::collection::vec(0u8..4, 9),
        perm_idx in 0usize..6,
    ) {
        let perms = [[1, 2, 3], [1, 3, 2], [2, 1, 3], [2, 3, 1], [3, 1, 2], [3, 2, 1]];
        let perm = perms[perm_idx];
        let map = |c: usize| if c == 0 { 0 } else { perm[c - 1] };
        let p = layers::softmax_forward(&Tensor4::from_vec(1, 4, 3, 3, logits).unwrap());
        let mut q = p.clone();
        for c in 0..4 {
            q.data[map(c) * 9..map(c) * 9 + 9].copy_from_slice(&p.data[c * 9..c * 9 + 9]);
        }
        let t2: Vec<u8> = target.iter().map(|&t| map(t as usize) as u8).collect();
        let (a, ga) = soft_dice(&p, &target).unwrap();
        let (b, gb) = soft_dice(&q, &t2).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        for c in 0..4 {
            for px in 0..9 {
                prop_assert!((ga.data[c * 9 + px] - gb.data[map(c) * 9 + px]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn random_network_output_is_normalised() {
    let net = UNet::<f32>::new(UNetConfig::with_classes(8), 11).unwrap();
    let x = Tensor4::from_vec(2, 1, 32, 16, (0..1024).map(|i| (i % 13) as f32 / 13.0).collect()).unwrap();
    let p = net.forward(&x, Mode::Eval).unwrap().probs;
    assert_eq!(p.dims(), (2, 8, 32, 16));
    for i in 0..2 {
        let s = p.sample(i);
        for px in 0..512 {
            let t: f32 = (0..8).map(|c| s[c * 512 + px]).sum();
            assert!((t - 1.0).abs() <= 1e-5);
        }
    }
}
