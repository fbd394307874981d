use nalgebra::DMatrix;
use proptest::prelude::*;
use psagan::nn::{self, Conv1d, Linear, MainBlock, SelfAttention1D, SpectralNorm};
use psagan_tensor::gradcheck::{self, Tolerance, Trial};
use psagan_tensor::{SeededRng, Tensor};

const TRIALS: usize = 20;

fn largest_singular_value(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    let m = DMatrix::from_row_iterator(rows, cols, w.to_vec().into_iter().map(|v| v as f64));
    m.singular_values().max()
}

fn assert_trials(name: &str, trials: &[Trial], tol: &Tolerance) {
    let worst = trials.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    eprintln!("{name}: worst rel err {worst:e}");
    assert!(trials.len() >= TRIALS);
    for t in trials {
        assert!(t.passes(tol), "{name}: {t:?}");
    }
}

/// Directional checks with respect to the input and every parameter of `m`.
/// Spectral-norm vectors are frozen so repeated forwards agree.
fn check_module(
    name: &str,
    m: &dyn nn::Module,
    x_shape: &[usize],
    seed: u64,
    f: impl Fn(&Tensor) -> Tensor,
) {
    check_module_where(name, m, x_shape, seed, f, |_| true)
}

/// As `check_module`, resampling inputs until `admissible` accepts them.
fn check_module_where(
    name: &str,
    m: &dyn nn::Module,
    x_shape: &[usize],
    seed: u64,
    f: impl Fn(&Tensor) -> Tensor,
    admissible: impl Fn(&Tensor) -> bool,
) {
    let tol = Tolerance::default();
    let mut rng = SeededRng::new(seed);
    nn::set_sn_updates(m, false);
    let mut trials = Vec::new();
    for _ in 0..TRIALS {
        let x = loop {
            let x = Tensor::rand_uniform(x_shape, -1.0, 1.0, &mut rng);
            if admissible(&x) {
                break x.into_param();
            }
        };
        let mut inputs = vec![x.clone()];
        inputs.extend(nn::parameters(m).into_iter().map(|(_, p)| p));
        let out = f(&x);
        let proj = gradcheck::projection(out.shape(), &mut rng);
        trials.push(
            gradcheck::directional_projected(&inputs, || Ok(f(&x)), &proj, &tol, &mut rng).unwrap(),
        );
    }
    nn::zero_grads(m);
    assert_trials(name, &trials, &tol);
}

#[test]
fn spectral_norm_of_diagonal_matrix() {
    let mut rng = SeededRng::new(0);
    let sn = SpectralNorm::new(2, &mut rng);
    sn.set_iterations(50);
    let w = Tensor::from_vec(vec![3.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
    let wn = sn.normalize(&w).unwrap();
    let v = wn.to_vec();
    assert!(
        (v[0] - 1.0).abs() < 1e-6 && (v[3] - 1.0 / 3.0).abs() < 1e-6,
        "{v:?}"
    );
    assert!((sn.sigma(&w) - 3.0).abs() < 1e-9);
}

#[test]
fn spectral_norm_without_updates_keeps_u() {
    let mut rng = SeededRng::new(1);
    let sn = SpectralNorm::new(4, &mut rng);
    let w = Tensor::rand_uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let before = sn.u().to_vec();
    sn.set_updates(false);
    sn.normalize(&w).unwrap();
    assert_eq!(before, sn.u().to_vec());
    sn.set_updates(true);
    psagan_tensor::no_grad(|| sn.normalize(&w).unwrap());
    assert_eq!(before, sn.u().to_vec());
    sn.normalize(&w).unwrap();
    assert_ne!(before, sn.u().to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spectral_norm_converges_to_svd(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..8) {
        let mut rng = SeededRng::new(seed);
        let sn = SpectralNorm::new(rows, &mut rng);
        let w = Tensor::rand_uniform(&[rows, cols], -2.0, 2.0, &mut rng);
        let oracle = largest_singular_value(&w);
        sn.set_iterations(500);
        let wn = sn.normalize(&w).unwrap();
        prop_assert!((sn.sigma(&w) - oracle).abs() <= 1e-3 * oracle.max(1.0), "{} vs {oracle}", sn.sigma(&w));
        prop_assert!((largest_singular_value(&wn) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, len in 1usize..20) {
        let mut rng = SeededRng::new(seed);
        let sa = SelfAttention1D::new(8, true, &mut rng);
        let x = Tensor::rand_uniform(&[2, 8, len], -1.0, 1.0, &mut rng);
        let a = sa.attention_map(&x).unwrap();
        prop_assert_eq!(a.shape(), &[2, len, len][..]);
        for row in a.to_vec().chunks(len) {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_output_shape(c_in in 1usize..5, c_out in 1usize..5, len in 3usize..30, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = SeededRng::new(0);
        let conv = Conv1d::same(c_in, c_out, k, true, &mut rng);
        let x = Tensor::zeros(&[2, c_in, len]);
        let y = conv.forward(&x).unwrap();
        prop_assert_eq!(y.shape(), &[2, c_out, len][..]);
    }
}

#[test]
fn main_block_is_f_at_initialisation() {
    let mut rng = SeededRng::new(2);
    let block = MainBlock::new(16, true, &mut rng);
    nn::set_sn_updates(&block, false);
    for _ in 0..100 {
        let len = 8 << rng.below(3);
        let x = Tensor::rand_uniform(&[3, 16, len], -2.0, 2.0, &mut rng);
        let fx = block.f(&x).unwrap().to_vec();
        let y = block.forward(&x).unwrap().to_vec();
        assert!(fx.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn conv_rejects_wrong_channels() {
    let mut rng = SeededRng::new(3);
    let conv = Conv1d::pointwise(4, 2, false, &mut rng);
    assert!(conv.forward(&Tensor::zeros(&[1, 3, 5])).is_err());
}

#[test]
fn spectral_conv_matches_finite_differences() {
    let mut rng = SeededRng::new(4);
    let conv = Conv1d::same(3, 4, 3, true, &mut rng);
    check_module("sn-conv", &conv, &[2, 3, 6], 5, |x| {
        conv.forward(x).unwrap()
    });
}

#[test]
fn spectral_linear_matches_finite_differences() {
    let mut rng = SeededRng::new(6);
    let lin = Linear::new(5, 3, true, &mut rng);
    check_module("sn-linear", &lin, &[4, 5], 7, |x| lin.forward(x).unwrap());
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = SeededRng::new(8);
    let sa = SelfAttention1D::new(8, true, &mut rng);
    check_module("attention", &sa, &[2, 8, 6], 9, |x| sa.attend(x).unwrap());
}

#[test]
fn main_block_matches_finite_differences() {
    let mut rng = SeededRng::new(10);
    let block = MainBlock::new(8, true, &mut rng);
    block.attention.as_ref().unwrap().gamma.data_mut()[0] = 0.7;
    let away_from_kink = |x: &Tensor| {
        block
            .conv
            .forward(x)
            .unwrap()
            .to_vec()
            .iter()
            .all(|z| z.abs() > 0.03)
    };
    check_module_where(
        "main-block",
        &block,
        &[1, 8, 4],
        11,
        |x| block.forward(x).unwrap(),
        away_from_kink,
    );
}
