use proptest::prelude::*;
use psagan_tensor::{Conv1dSpec, Tensor};

fn rows(max_len: usize) -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (1usize..4, 1usize..=max_len).prop_flat_map(|(r, l)| {
        prop::collection::vec(-10.0f32..10.0, r * l).prop_map(move |v| (r, l, v))
    })
}

proptest! {
    #[test]
    fn pool_then_upsample_keeps_constants(c in -100.0f32..100.0, half in 1usize..40) {
        let x = Tensor::full(&[2, 3, 2 * half], c);
        let y = x.avg_pool(2, 2).unwrap().upsample_linear().unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.to_vec().iter().all(|&v| v == c));
    }

    #[test]
    fn softmax_rows_sum_to_one((r, l, v) in rows(12)) {
        let y = Tensor::from_vec(v, &[r, l]).unwrap().softmax(1).unwrap().to_vec();
        for row in y.chunks(l) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn leaky_relu_matches_definition(v in prop::collection::vec(-5.0f32..5.0, 1..50), slope in 0.01f32..0.99) {
        let n = v.len();
        let y = Tensor::from_vec(v.clone(), &[n]).unwrap().leaky_relu(slope).to_vec();
        for (x, y) in v.iter().zip(y) {
            prop_assert_eq!(y, x.max(slope * x));
        }
    }

    #[test]
    fn avg_pool_output_length((r, l, v) in rows(30), kernel in 1usize..5, stride in 1usize..4) {
        let x = Tensor::from_vec(v, &[r, l]).unwrap();
        match x.avg_pool(kernel, stride) {
            Ok(y) => {
                prop_assert!(kernel <= l);
                prop_assert_eq!(y.shape(), &[r, (l - kernel) / stride + 1][..]);
            }
            Err(_) => prop_assert!(kernel > l),
        }
    }

    #[test]
    fn upsample_stays_within_input_range((r, l, v) in rows(20)) {
        let x = Tensor::from_vec(v.clone(), &[r, l]).unwrap();
        let y = x.upsample_linear().unwrap().to_vec();
        for (xr, yr) in v.chunks(l).zip(y.chunks(2 * l)) {
            let lo = xr.iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = xr.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(yr.iter().all(|&s| s >= lo - 1e-5 && s <= hi + 1e-5));
        }
    }

    #[test]
    fn causal_conv_matches_direct_sum(
        len in 1usize..12,
        kernel in 1usize..4,
        dilation in 1usize..6,
        seed in prop::collection::vec(-2.0f32..2.0, 16),
    ) {
        let x: Vec<f32> = (0..len).map(|i| seed[i % 16] + i as f32 * 0.1).collect();
        let w: Vec<f32> = (0..kernel).map(|k| seed[(k + 7) % 16]).collect();
        let y = Tensor::from_vec(x.clone(), &[1, 1, len]).unwrap()
            .conv1d_with(&Tensor::from_vec(w.clone(), &[1, 1, kernel]).unwrap(), None, Conv1dSpec::causal(kernel, dilation))
            .unwrap()
            .to_vec();
        prop_assert_eq!(y.len(), len);
        for t in 0..len {
            let direct: f32 = (0..kernel)
                .filter_map(|k| (t + k * dilation).checked_sub((kernel - 1) * dilation).map(|s| w[k] * x[s]))
                .sum();
            prop_assert!((y[t] - direct).abs() < 1e-4, "t {} got {} want {}", t, y[t], direct);
        }
    }

    #[test]
    fn matmul_is_linear_in_left_argument(
        a in prop::collection::vec(-2.0f32..2.0, 6),
        b in prop::collection::vec(-2.0f32..2.0, 6),
        k in -3.0f32..3.0,
    ) {
        let a = Tensor::from_vec(a, &[2, 3]).unwrap();
        let b = Tensor::from_vec(b, &[3, 2]).unwrap();
        let lhs = a.scale(k).matmul(&b).unwrap().to_vec();
        let rhs = a.matmul(&b).unwrap().scale(k).to_vec();
        for (x, y) in lhs.iter().zip(rhs) {
            prop_assert!((x - y).abs() <= 1e-4 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn sum_backward_gives_ones(v in prop::collection::vec(-5.0f32..5.0, 1..40)) {
        let n = v.len();
        let x = Tensor::param(v, &[n]).unwrap();
        x.sum().backward().unwrap();
        prop_assert!(x.grad().unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn square_sum_backward_gives_twice_input(v in prop::collection::vec(-5.0f32..5.0, 1..40)) {
        let n = v.len();
        let x = Tensor::param(v.clone(), &[n]).unwrap();
        x.square().sum().backward().unwrap();
        for (g, x) in x.grad().unwrap().iter().zip(v) {
            prop_assert_eq!(*g, 2.0 * x);
        }
    }
}

#[test]
fn non_scalar_backward_is_rejected() {
    let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
    assert!(x.scale(2.0).backward().is_err());
}
