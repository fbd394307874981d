use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use psagan::data::{minmax_scale, real_batch, synthetic_panel, SeriesPanel, SyntheticSpec};
use psagan::fid::*;
use psagan::Error;
use psagan_tensor::{SeededRng, Tensor};

fn stats(mean: &[f64], cov: &[f64]) -> GaussianStats {
    let d = mean.len();
    GaussianStats {
        mean: DVector::from_column_slice(mean),
        cov: DMatrix::from_row_slice(d, d, cov),
    }
}

fn small_cfg() -> EncoderConfig {
    EncoderConfig {
        channels: 16,
        dim: 16,
        steps: 60,
        batch_size: 32,
        ..Default::default()
    }
}

#[test]
fn gaussian_stats_hand_case() {
    let s = gaussian_stats(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
    assert_eq!(s.mean.as_slice(), [1.0, 0.0]);
    assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    let same = gaussian_stats(&vec![vec![1.5, -2.0, 3.0]; 5]).unwrap();
    assert!(same.cov.iter().all(|&v| v == 0.0));
    assert!(matches!(
        gaussian_stats(&[vec![1.0]]),
        Err(Error::Contract(_))
    ));
    assert!(gaussian_stats(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn covariance_is_exactly_symmetric() {
    let mut rng = SeededRng::new(0);
    let rows: Vec<Vec<f64>> = (0..50)
        .map(|_| (0..6).map(|_| rng.normal() as f64).collect())
        .collect();
    let s = gaussian_stats(&rows).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            assert_eq!(s.cov[(i, j)].to_bits(), s.cov[(j, i)].to_bits());
        }
    }
}

#[test]
fn frechet_closed_forms() {
    let a = stats(&[0.0], &[1.0]);
    assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    assert!((frechet_distance(&a, &stats(&[1.0], &[1.0])).unwrap() - 1.0).abs() < 1e-6);
    assert!((frechet_distance(&a, &stats(&[0.0], &[4.0])).unwrap() - 1.0).abs() < 1e-6);
    assert!(frechet_distance(&a, &stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0])).is_err());
}

#[test]
fn frechet_rejects_indefinite_covariance() {
    let bad = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -0.5]);
    let ok = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
    match frechet_distance(&bad, &ok) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("eigenvalue"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let tiny = stats(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1e-9]);
    assert!(frechet_distance(&tiny, &ok).is_ok());
}

fn random_spd(d: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.normal() as f64);
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in 0u64..10_000, d in 1usize..7) {
        let mut rng = SeededRng::new(seed);
        let a = GaussianStats { mean: DVector::from_fn(d, |_, _| rng.normal() as f64), cov: random_spd(d, &mut rng) };
        let b = GaussianStats { mean: DVector::from_fn(d, |_, _| rng.normal() as f64), cov: random_spd(d, &mut rng) };
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.max(1.0), "{ab} vs {ba}");
        prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn frechet_matches_diagonal_closed_form(
        va in prop::collection::vec(0.01f64..5.0, 1..6),
        seed in 0u64..1000,
    ) {
        let d = va.len();
        let mut rng = SeededRng::new(seed);
        let vb: Vec<f64> = (0..d).map(|_| rng.uniform_f64() * 5.0 + 0.01).collect();
        let ma: Vec<f64> = (0..d).map(|_| rng.normal() as f64).collect();
        let mb: Vec<f64> = (0..d).map(|_| rng.normal() as f64).collect();
        let oracle: f64 = (0..d).map(|k| (ma[k] - mb[k]).powi(2) + (va[k].sqrt() - vb[k].sqrt()).powi(2)).sum();
        let a = GaussianStats { mean: DVector::from_vec(ma), cov: DMatrix::from_diagonal(&DVector::from_vec(va)) };
        let b = GaussianStats { mean: DVector::from_vec(mb), cov: DMatrix::from_diagonal(&DVector::from_vec(vb)) };
        let fd = frechet_distance(&a, &b).unwrap();
        prop_assert!((fd - oracle).abs() <= 1e-9 * oracle.max(1.0), "{fd} vs {oracle}");
    }
}

#[test]
fn disjoint_samples_of_one_gaussian_are_close() {
    let mut rng = SeededRng::new(7);
    let d = 8;
    let mix = DMatrix::from_fn(d, d, |_, _| rng.normal() as f64 * 0.5);
    let draw = |rng: &mut SeededRng| -> Vec<Vec<f64>> {
        (0..4096)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| rng.normal() as f64);
                (&mix * z).iter().map(|v| v + 1.0).collect()
            })
            .collect()
    };
    let a = gaussian_stats(&draw(&mut rng)).unwrap();
    let b = gaussian_stats(&draw(&mut rng)).unwrap();
    let fd = frechet_distance(&a, &b).unwrap();
    assert!(fd < 0.05, "{fd}");
}

#[test]
fn triplet_loss_at_zero_embeddings() {
    let z = Tensor::zeros(&[3, 4]);
    let l = triplet_loss(&z, &z, &[z.clone(), z.clone()])
        .unwrap()
        .item() as f64;
    assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-6);
    let a = Tensor::from_vec(vec![3.0, 0.0], &[1, 2]).unwrap();
    let n = Tensor::from_vec(vec![-3.0, 0.0], &[1, 2]).unwrap();
    let good = triplet_loss(&a, &a, &[n.clone()]).unwrap().item();
    let bad = triplet_loss(&a, &n, &[a.clone()]).unwrap().item();
    assert!(good < 1e-3 && bad > 17.0);
}

#[test]
fn untrained_encoder_embeddings() {
    let enc = CausalEncoder::new(small_cfg()).unwrap();
    let mut rng = SeededRng::new(1);
    let x = Tensor::rand_uniform(&[5, 1, 40], 0.0, 1.0, &mut rng);
    let z = embed(&enc, &x).unwrap();
    assert_eq!((z.len(), z[0].len()), (5, 16));
    assert!(z.iter().flatten().all(|v| v.is_finite()));
    let v = x.to_vec();
    for k in 0..5 {
        let single = Tensor::from_vec(v[k * 40..(k + 1) * 40].to_vec(), &[1, 1, 40]).unwrap();
        assert_eq!(embed(&enc, &single).unwrap()[0], z[k]);
    }
    let twice = Tensor::from_vec([&v[..40], &v[..40]].concat(), &[2, 1, 40]).unwrap();
    let zz = embed(&enc, &twice).unwrap();
    assert_eq!(zz[0], zz[1]);
    assert!(matches!(
        embed(&enc, &Tensor::zeros(&[1, 1, 4])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn encoder_is_causal() {
    let enc = CausalEncoder::new(small_cfg()).unwrap();
    let mut rng = SeededRng::new(2);
    for _ in 0..20 {
        let len = 16 + rng.below(48);
        let x = Tensor::rand_uniform(&[1, 1, len], 0.0, 1.0, &mut rng);
        let y = x.detach();
        y.data_mut()[len - 1] += rng.uniform(0.5, 2.0);
        let (fx, fy) = (
            enc.features(&x).unwrap().to_vec(),
            enc.features(&y).unwrap().to_vec(),
        );
        let c = enc.config().channels;
        let mut last_differs = false;
        for ch in 0..c {
            for t in 0..len {
                let (a, b) = (fx[ch * len + t], fy[ch * len + t]);
                if t + 1 < len {
                    assert_eq!(a.to_bits(), b.to_bits(), "channel {ch} step {t}");
                } else {
                    last_differs |= a != b;
                }
            }
        }
        assert!(last_differs);
    }
}

#[test]
fn encoder_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    let cfg = EncoderConfig {
        seed: 9,
        ..small_cfg()
    };
    let enc = CausalEncoder::new(cfg.clone()).unwrap();
    enc.save(&path).unwrap();
    let back = CausalEncoder::load(&path).unwrap();
    assert_eq!(back.config(), &cfg);
    let x = Tensor::rand_uniform(&[3, 1, 32], 0.0, 1.0, &mut SeededRng::new(0));
    assert_eq!(embed(&enc, &x).unwrap(), embed(&back, &x).unwrap());
}

fn two_class_panel() -> SeriesPanel {
    let mut rng = SeededRng::new(4);
    let values = (0..8)
        .map(|i| {
            let period = if i % 2 == 0 { 12.0 } else { 48.0 };
            let phase = rng.uniform_f64() * std::f64::consts::TAU;
            (0..600)
                .map(|t| {
                    0.5 + 0.4 * (std::f64::consts::TAU * t as f64 / period + phase).sin()
                        + 0.02 * rng.normal() as f64
                })
                .collect()
        })
        .collect();
    let start = NaiveDate::from_ymd_opt(2021, 1, 4)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    SeriesPanel::new((0..8).map(|i| format!("c{i}")).collect(), start, values).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn trained_encoder_separates_periods() {
    let panel = two_class_panel();
    let (enc, losses) = train_encoder(
        &panel,
        64,
        EncoderConfig {
            steps: 150,
            ..small_cfg()
        },
    )
    .unwrap();
    assert!(losses.iter().all(|l| l.is_finite()));
    let pairs: Vec<(usize, usize)> = (0..8)
        .flat_map(|i| (0..6).map(move |k| (i, 40 + 80 * k)))
        .collect();
    let z = embed(&enc, &real_batch(&panel, &pairs, 64).unwrap()).unwrap();
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for a in 0..pairs.len() {
        for b in a + 1..pairs.len() {
            let c = cosine(&z[a], &z[b]);
            if pairs[a].0 % 2 == pairs[b].0 % 2 {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    let (within, cross) = (within / nw as f64, cross / nc as f64);
    assert!(within > cross, "within {within} cross {cross}");
}

fn scaled_panel() -> SeriesPanel {
    let raw = synthetic_panel(&SyntheticSpec {
        n_series: 6,
        len: 800,
        ..Default::default()
    })
    .unwrap();
    minmax_scale(&raw, false).unwrap().0
}

#[test]
fn encoder_loss_falls_early() {
    let (_, losses) = train_encoder(
        &scaled_panel(),
        64,
        EncoderConfig {
            steps: 50,
            ..small_cfg()
        },
    )
    .unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn encoder_rejects_short_windows() {
    let r = train_encoder(&scaled_panel(), 8, small_cfg());
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn context_fid_orders_real_noisy_and_noise() {
    let panel = scaled_panel();
    let (enc, _) = train_encoder(&panel, 32, small_cfg()).unwrap();
    let score = |eps: f32, seed: u64| {
        let mut src = |pairs: &[(usize, usize)], rng: &mut SeededRng| {
            let real = real_batch(&panel, pairs, 32)?;
            Ok(real.add(&Tensor::randn(real.shape(), eps, rng))?)
        };
        context_fid(&enc, &panel, 32, 256, 2, seed, &mut src).unwrap()
    };
    let clean = score(0.0, 1);
    let r1 = score(0.1, 1);
    let r3 = score(0.3, 1);
    assert!(
        clean.mean < 1e-9 && clean.mean < r1.mean && r1.mean < r3.mean,
        "{} {} {}",
        clean.mean,
        r1.mean,
        r3.mean
    );
    assert_eq!(clean.n_windows, 256);
    assert_eq!(r1, score(0.1, 1));

    let mut disjoint = |pairs: &[(usize, usize)], _: &mut SeededRng| {
        let moved: Vec<_> = pairs.iter().map(|&(i, t)| ((i + 1) % 6, t)).collect();
        real_batch(&panel, &moved, 32)
    };
    let self_score = context_fid(&enc, &panel, 32, 256, 2, 3, &mut disjoint).unwrap();
    let mut white = |pairs: &[(usize, usize)], rng: &mut SeededRng| {
        Ok(Tensor::randn(&[pairs.len(), 1, 32], 1.0, rng))
    };
    let noise = context_fid(&enc, &panel, 32, 256, 2, 3, &mut white).unwrap();
    assert!(
        noise.mean > 10.0 * self_score.mean,
        "{} vs {}",
        noise.mean,
        self_score.mean
    );

    let mut any =
        |pairs: &[(usize, usize)], _: &mut SeededRng| Ok(Tensor::zeros(&[pairs.len(), 1, 32]));
    assert!(matches!(
        context_fid(&enc, &panel, 32, 100_000, 1, 0, &mut any),
        Err(Error::Config(_))
    ));
}
